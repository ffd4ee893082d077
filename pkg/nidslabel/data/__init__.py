"""
Labeled-rule dataset construction, filtering, splitting, and persistence.
"""
