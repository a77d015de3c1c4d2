"""
End-to-end checks on calibrated synthetic traces.
"""
