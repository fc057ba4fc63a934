import logging
import sys

from progseg.core import config

LOG_FORMAT = '%(asctime)s [%(levelname)-7s] %(name)s: %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def configure_logging(verbose: bool = False):
    """stderr at INFO (DEBUG with -v), plus an always-DEBUG file log under LOG_DIR."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format=LOG_FORMAT,
                        datefmt=LOG_DATEFMT,
                        stream=sys.stderr)
    root = logging.getLogger()
    for handler in root.handlers:
        handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    try:
        if not config.ensure_dir(config.LOG_DIR):
            raise OSError(f"cannot create {config.LOG_DIR}")
        file_handler = logging.FileHandler(config.LOG_DIR / config.LOG_FILE_NAME, encoding='utf-8', mode='a')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
        file_handler.setLevel(logging.DEBUG)
        root.addHandler(file_handler)
        root.setLevel(logging.DEBUG)
        logging.debug("File logging initialized.")
    except Exception as log_e:
        logging.error(f"Failed to set up file logging: {log_e}")
    # third-party chatter stays out of the debug log
    for noisy in ("matplotlib", "PIL", "rasterio"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    configure_logging(verbose="-v" in argv or "--verbose" in argv)

    from progseg import cli
    sys.exit(cli.main(argv))


if __name__ == "__main__":
    main()
