"""
Snort rule parsing and canonical feature text.
"""
