import logging
import logging.config

"""
This file configures logging for the kronsbl library and CLI.

Library modules only create loggers under the "kronsbl" namespace and never
attach handlers themselves. The CLI calls `configure()` once to install a
stderr handler with the same format the test runner uses (see pytest.ini).

Under pytest, log records are captured and shown in their own section; run
pytest with `--log-cli-level=DEBUG` to watch estimator iterations live.
"""

LOG_FORMAT = "%(asctime)s.%(msecs)-3d %(levelname)s [%(filename)s:%(lineno)d] %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# this config is only used for default log levels,
# handlers are installed by configure()
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "loggers": {
        "kronsbl": {"level": "INFO", "propagate": True},
        "kronsbl.estimators": {"level": "INFO"},  # a lot of logs on DEBUG level
    },
}


def getLogger(name="kronsbl") -> logging.Logger:
    """Method to get a logger for library code.

    Should be used to get correctly initialized logger."""
    return logging.getLogger(name)


def configure(level: int = logging.INFO) -> None:
    """Attach a stderr handler to the "kronsbl" logger, used by the CLI."""
    config = {
        **LOGGING,
        "formatters": {"default": {"format": LOG_FORMAT, "datefmt": LOG_DATE_FORMAT}},
        "handlers": {
            "stderr": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "stream": "ext://sys.stderr",
            }
        },
        "loggers": {
            "kronsbl": {"level": level, "handlers": ["stderr"], "propagate": False},
            "kronsbl.estimators": {"level": level},
        },
    }
    logging.config.dictConfig(config)


# default logger for the library
log = getLogger()

logging.config.dictConfig(LOGGING)
