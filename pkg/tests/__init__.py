"""
Тесты mqbench
"""
