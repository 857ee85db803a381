# app.py

import sys

from agentlogger import print_header
from diffclassifier.commands import run

print_header("DIFFUSION CLASSIFIER", font="slant", color="cyan")

if __name__ == "__main__":
    sys.exit(run())
