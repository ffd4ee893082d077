import sys

from nidslabel.main import run

sys.exit(run(sys.argv[1:]))
