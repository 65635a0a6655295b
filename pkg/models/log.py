import logging

import colorlog

_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"


def setup_logging(level=logging.INFO):
    """ Install one colored stream handler on the package root logger """
    root = logging.getLogger("d3net")
    root.setLevel(level)
    if not any(getattr(h, "_d3net", False) for h in root.handlers):
        handler = colorlog.StreamHandler()
        handler.setFormatter(colorlog.ColoredFormatter(_FORMAT))
        handler._d3net = True
        root.addHandler(handler)
    return root


def get_logger(name):
    # models.trainer -> d3net.trainer
    return logging.getLogger("d3net." + name.rsplit(".", 1)[-1])
