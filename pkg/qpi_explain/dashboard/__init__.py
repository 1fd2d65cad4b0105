"""qpi-explain dashboard - TUI for browsing runs and their reports"""
from .app import QpiDashboard, main

__all__ = ['QpiDashboard', 'main']
