"""Multi-timescale scheduling for a combined electricity and heat hub.

The package couples a day-ahead robust commitment stage with hour-ahead and
intra-hour re-dispatch, all over an in-repo mixed-binary second-order-cone
solver (:mod:`hubsched.conic`).
"""

__version__ = "0.1.0"
