import sys
from pathlib import Path

# tests import the scalar oracle module by file location
sys.path.insert(0, str(Path(__file__).parent))
