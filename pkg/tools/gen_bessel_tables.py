"""Regenerate the Chebyshev tables used for K0 and K1 on [2, inf).

The scaled functions exp(x) * sqrt(x) * K_n(x) are expanded in Chebyshev
polynomials of t = 4/x - 1, computed with mpmath at 50 digits.

    python tools/gen_bessel_tables.py > src/heatbie/_bessel_tables.py
"""
import mpmath as mp

mp.mp.dps = 50
DEG = 40


def scaled(n, t):
    x = 4 / (t + 1)
    return mp.exp(x) * mp.sqrt(x) * mp.besselk(n, x)


def cheb_coeffs(f, deg):
    m = deg + 1
    nodes = [mp.cos(mp.pi * (k + mp.mpf(1) / 2) / m) for k in range(m)]
    vals = [f(t) for t in nodes]
    out = []
    for j in range(m):
        s = sum(v * mp.cos(mp.pi * j * (k + mp.mpf(1) / 2) / m) for k, v in enumerate(vals))
        out.append(2 * s / m)
    out[0] /= 2
    return out


def main():
    print('"""Chebyshev coefficients of exp(x) sqrt(x) K_n(x) in t = 4/x - 1 (generated)."""')
    print("import numpy as np\n")
    for n in (0, 1):
        c = cheb_coeffs(lambda t: scaled(n, t), DEG)
        # drop the tail below double precision
        while abs(c[-1]) < mp.mpf("1e-19"):
            c.pop()
        print(f"K{n}_CHEB = np.array([")
        for v in c:
            print(f"    {mp.nstr(v, 20, min_fixed=1, max_fixed=0)},")
        print("])\n")


if __name__ == "__main__":
    main()
