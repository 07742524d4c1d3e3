"""Pytest path setup so test modules can import the local helpers."""

import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
