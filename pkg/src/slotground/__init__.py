"""Grounded defect reporting: fusion, slot evidence, two-hop grounding and rule-reward RL."""
