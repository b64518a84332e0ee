"""Write the multiprecision Bessel oracle shipped with the package.

Columns: function, x, value (30 significant digits, mpmath at 60 digits).

    python tools/gen_bessel_oracle.py > src/heatbie/data/bessel_oracle.csv
"""
import mpmath as mp
import numpy as np

mp.mp.dps = 60


def rows():
    xs_k = np.unique(np.concatenate([np.minimum(np.logspace(-8, np.log10(700), 120), 700.0),
                                     [0.5, 1.0, 1.999, 2.0, 2.001, 5.0, 10.0, 50.0]]))
    for x in xs_k:
        xm = mp.mpf(float(x))
        yield "K0", x, mp.besselk(0, xm)
        yield "K1", x, mp.besselk(1, xm)
    xs_j = np.unique(np.concatenate([np.logspace(-3, 2, 80), [1.0, 2.404825557695773]]))
    for x in xs_j:
        xm = mp.mpf(float(x))
        yield "J0", x, mp.besselj(0, xm)
        yield "Y0", x, mp.bessely(0, xm)
        yield "J1", x, mp.besselj(1, xm)
        yield "Y1", x, mp.bessely(1, xm)


if __name__ == "__main__":
    print("function,x,value")
    for name, x, v in rows():
        print(f"{name},{float(x)!r},{mp.nstr(v, 30)}")
