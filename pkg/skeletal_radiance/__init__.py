"""
Skeletal radiance fields: novel view synthesis of articulated performers from a few
input views, with a numpy autodiff engine and a built-in synthetic capture generator
"""

__version__ = "1.0"
