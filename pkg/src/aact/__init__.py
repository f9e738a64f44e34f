"""Closed-loop automotive security test bench.

Abstract attack scenarios are compiled against a SUT catalog into executable
test cases, run through the execution engine against a simulated ECU, and
judged by a rule-based oracle. A digital twin of the firmware feeds model
based test generation (mutants, model checking, findings-to-DSL).
"""

__version__ = "0.1.0"
