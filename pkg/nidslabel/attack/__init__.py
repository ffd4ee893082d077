"""
ATT&CK technique/tactic registry.
"""
