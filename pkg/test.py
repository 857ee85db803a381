from diffclassifier.tests import *
