from .diffusion_tests import *
from .denoisers_tests import *
from .strategies_tests import *
from .classifier_tests import *
from .oracle_tests import *
from .harness_tests import *
from .commands_tests import *