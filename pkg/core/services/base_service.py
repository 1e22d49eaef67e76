# core/services/base_service.py
import logging
from typing import Callable, Optional

StatusCallback = Callable[[str], None]


class BaseService:
    """Status reporting shared by the services.

    Messages go to ``status_callback`` when one is given, otherwise to the
    logger of the concrete service module.
    """

    def __init__(self, status_callback: Optional[StatusCallback] = None):
        self.status_callback = status_callback

    def _status(self, message: str) -> None:
        if self.status_callback is not None:
            self.status_callback(message)
        else:
            logging.getLogger(type(self).__module__).info(message)
