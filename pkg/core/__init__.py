# Core library of the multi-bit patch-defense lab
# Graph, quantization, perceptual metrics, losses, models, curriculum, attacks and configuration
