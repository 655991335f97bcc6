import logging
import sys


class Logger:
    @staticmethod
    def setup(level="INFO"):
        logging.basicConfig(
            stream=sys.stdout,
            level=getattr(logging, str(level).upper(), logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
