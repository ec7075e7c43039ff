import logging
import os


logger = logging.getLogger('segadapt')

if not logger.handlers:
    _handler = logging.StreamHandler()
    _handler.setFormatter(
        logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s')
    )
    logger.addHandler(_handler)

logger.setLevel(os.environ.get('SEGADAPT_LOG_LEVEL', 'INFO').upper())

IGNORE_LABEL = 255
