"""
Test suite for the MoE expert placement simulator.
"""
