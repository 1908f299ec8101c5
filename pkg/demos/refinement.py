"""Show how length refinement changes the grounded span on a planted trace."""

import numpy as np

from tqground.wsqg import WsqgConfig, ground, scored_proposals

A = np.full(16, 0.1)
A[2:10] = 0.8      # long plateau
A[12] = 0.95       # single sharp spike

for p in scored_proposals(A):
    print(f"[{p.span.st:2d}, {p.span.ed:2d}]  raw {p.raw_score:.3f}  refined {p.refined_score:.3f}")
print("unrefined pick:", ground(A, WsqgConfig(refine=False)))
print("refined pick:  ", ground(A))
