"""Parabolic complex Monge-Ampere flows on flat complex tori."""
__version__ = "0.1.0"
