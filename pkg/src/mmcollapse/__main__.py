import sys

from mmcollapse.cli import main

sys.exit(main())
