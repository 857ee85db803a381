from .errors import *
from .diffusion import *
from .denoisers import *
from .strategies import *
from .classifier import *
from .oracle import *
from .harness import *
from .commands import *
