# pathkernel/__init__.py
"""
Exact path kernel decomposition of gradient-trained models:
record a training trajectory, rebuild predictions as a sum over steps and
training points, and attribute them to parameter components.
"""

__version__ = "0.1.0"
