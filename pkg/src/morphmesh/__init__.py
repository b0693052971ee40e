"""Kinematic modelling, actuator placement and shape control of morphing-cover meshes."""
__version__ = "0.1.0"
