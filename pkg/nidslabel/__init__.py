"""
nidslabel - label Snort NIDS rules with MITRE ATT&CK techniques and tactics.
"""

__version__ = "0.1.0"
