# This file makes the workloads directory a Python package
