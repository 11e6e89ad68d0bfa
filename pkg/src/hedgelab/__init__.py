"""GJR-GARCH hedging lab.

Simulates a GJR-GARCH(1,1) equity market, prices European calls by
risk-neutral Monte Carlo, trains a feedforward hedging policy on an
empirical CVaR objective, benchmarks it against Monte Carlo delta
hedging, and tests whether the deep-minus-delta overlay behaves like a
statistical arbitrage.
"""

__version__ = "0.1.0"
