# %% [markdown]
# # How many decisions make an accuracy significant?
#
# The threshold is the smallest fraction of correct decisions whose
# probability under coin flipping falls below alpha.

# %%
from stimdecode import significance_threshold
from stimdecode.decision import chance_band

for n in (10, 20, 80, 200, 1000):
    lo, hi = chance_band(n, 0.99)
    print(f"n={n:>5}  threshold {100 * significance_threshold(n):5.1f}%  "
          f"99% chance band [{100 * lo:.1f}, {100 * hi:.1f}]%")

# %% [markdown]
# The threshold falls with n but not strictly: k*/n steps up whenever the
# integer k* increments.

# %%
print([round(significance_threshold(n), 3) for n in range(1, 11)])
