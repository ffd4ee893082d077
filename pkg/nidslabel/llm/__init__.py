"""
Prompt construction, response parsing, and LLM labeling workflows.
"""
