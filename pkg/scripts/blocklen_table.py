"""Tabulate the cube-root block-length rule against brute force.

For each n: the chosen r, the score-element count xi(r) it implies, the
brute-force optimum, and the relative overhead of using the rule.  The rule
lands within one of the optimum everywhere in this range.
"""

import math

from blockattn.bench import count_score_elements
from blockattn.encoder import select_block_length

LENGTHS = (8, 16, 32, 64, 128, 256, 384, 512, 1024)


def xi(n, r):
    return count_score_elements(n, r).total("biblosa")


def main():
    print(f"{'n':>6} {'rule r':>7} {'xi(rule)':>9} {'best r':>7} "
          f"{'xi(best)':>9} {'overhead':>9}")
    for n in LENGTHS:
        r = select_block_length(n)
        best = min(range(1, n + 1), key=lambda rr: xi(n, rr))
        over = xi(n, r) / xi(n, best) - 1.0
        print(f"{n:>6} {r:>7} {xi(n, r):>9} {best:>7} {xi(n, best):>9} "
              f"{over:>8.1%}")
        assert abs(r - best) <= 1

    # the rule is the real minimizer of the continuous relaxation
    n = 512
    cont = (2.0 * n) ** (1.0 / 3.0)
    print(f"\ncontinuous argmin at n={n}: (2n)^(1/3) = {cont:.3f}, "
          f"rule rounds to {select_block_length(n)}, "
          f"m = {math.ceil(n / select_block_length(n))}")


if __name__ == "__main__":
    main()
