"""ISAC-LOCATE: device-free target sensing in OFDM cellular networks"""

from .version import __version__
