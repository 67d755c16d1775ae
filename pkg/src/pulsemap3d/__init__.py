"""Quasi-stationary blood pulsation maps from multi-view RGB video, lifted into
the UV texture space of a fitted morphable head model."""

__version__ = "0.1.0"
