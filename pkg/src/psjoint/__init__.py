import logging

from . import clients as clients
from .config import config as config
from . import exposure as exposure
from . import file_input as file_input
from . import file_output as file_output
from . import inference as inference
from . import mesh as mesh
from . import model as model
from . import preprocess as preprocess
from . import simulate as simulate
from . import spde as spde

__version__ = "0.1.0"


def set_logging(level=logging.INFO):
    logging.basicConfig(format="%(levelname)s - %(name)s - %(message)s")
    logging.getLogger("psjoint").setLevel(level)
