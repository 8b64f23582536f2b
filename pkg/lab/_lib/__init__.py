# CMDF lab shared library
