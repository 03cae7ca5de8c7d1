"""Unit and acceptance tests for the GaLore+ package"""
