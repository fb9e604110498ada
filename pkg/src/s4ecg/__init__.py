"""Structured state space models for multichannel physiological signal classification"""
