"""
Package for geometric transforms: thin-plate splines and rigid motion
"""
