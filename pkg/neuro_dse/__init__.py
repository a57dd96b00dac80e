"""
Neuro-DSE toolkit
Dynamic state estimation for networked microgrids with a neural ExSys model
"""

__version__ = "0.1.0"
