import logging
import os

LOG_LEVEL = os.getenv("COXMT_LOG_LEVEL", "INFO")

_configured = False


def _configure() -> None:
    global _configured
    if _configured:
        return
    handler = logging.StreamHandler()
    # Aynı "[Worker] mesaj" formatı
    handler.setFormatter(logging.Formatter("[%(component)s] %(message)s"))
    root = logging.getLogger("coxmt")
    root.addHandler(handler)
    root.setLevel(LOG_LEVEL.upper())
    root.propagate = False
    _configured = True


class _ComponentAdapter(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        extra = dict(kwargs.get("extra") or {})
        extra.setdefault("component", self.extra["component"])
        kwargs["extra"] = extra
        return msg, kwargs


def get_logger(component: str) -> logging.LoggerAdapter:
    """
    Component bazlı logger: get_logger("Trainer").info("...") → "[Trainer] ..."
    """
    _configure()
    logger = logging.getLogger(f"coxmt.{component.lower()}")
    return _ComponentAdapter(logger, {"component": component})


def set_level(level: str) -> None:
    _configure()
    logging.getLogger("coxmt").setLevel(level.upper())
