# Services: datasets, patch pools, training, checkpoints, evaluation, reports and campaigns
