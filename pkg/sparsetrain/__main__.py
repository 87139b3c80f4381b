import sys

from sparsetrain.main import main

sys.exit(main())
