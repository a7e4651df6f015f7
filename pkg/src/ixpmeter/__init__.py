"""Distributed IXP measurement toolkit.

Probes a national address space with Paris-traceroute style measurements,
classifies each route as IXP, P2P, International or Misbehavior and turns
the result into weekly end-user performance series.
"""

__version__ = "0.1.0"
