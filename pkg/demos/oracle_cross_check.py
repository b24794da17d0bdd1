"""Check the frequency-domain solver against a stochastic simulation.

Integrates the Langevin equations with the delay-line feedback and compares
occupation and linewidth with the solver for each canonical configuration.
Takes about a minute.

    python demos/oracle_cross_check.py
"""
from optofeedback import tdoracle

for name, (dev, probe, filt, noise) in tdoracle.canonical_configurations().items():
    report, res = tdoracle.cross_validate(dev, probe, filt, noise, seed=1, linewidths=2e4)
    parts = ", ".join(f"{c.observable} {c.linsolve:.4g} vs {c.tdoracle:.4g} ({c.rel_dev:+.1%})"
                      for c in report)
    print(f"{name:16} {parts}  [{'pass' if all(c.ok for c in report) else 'FAIL'}]")
