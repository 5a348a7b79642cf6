# This file can remain empty. It marks the 'scripts' directory as a Python package if needed.
