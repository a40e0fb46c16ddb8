# %% [markdown]
# # From audio to a trained decoder
#
# A synthetic "speech" signal is turned into a 20 Hz envelope. The envelope
# drives a toy 8-channel EEG through a causal response. A backward decoder is
# trained to reconstruct the envelope from the EEG.

# %%
import numpy as np

from stimdecode import (
    MultichannelSignal,
    audio_to_envelope,
    build_lag_matrix,
    pearson,
    preprocess,
    preprocess_envelope,
    reconstruct,
)
from stimdecode.decoder import train_decoder, trial_statistics

rng = np.random.default_rng(0)

# %% [markdown]
# Amplitude-modulated noise stands in for speech. The 3 Hz modulation sits
# inside the band the decoder works on.

# %%
fs_audio = 16000.0
t = np.arange(int(60 * fs_audio)) / fs_audio
modulation = 1.0 + 0.8 * np.sin(2 * np.pi * 3.0 * t) * np.sin(2 * np.pi * 0.2 * t)
audio = MultichannelSignal(modulation * rng.standard_normal(t.size), fs_audio)
envelope = preprocess_envelope(audio_to_envelope(audio))
print(f"envelope: {envelope.n_samples} samples at {envelope.fs:g} Hz")

# %% [markdown]
# The EEG is the envelope filtered by a random 9-tap kernel per channel, plus
# noise, then bandpassed, resampled and z-scored like real recordings.

# %%
s = envelope.values
kernel = rng.standard_normal((8, 9))
clean = np.stack([np.convolve(s, k)[: s.size] for k in kernel], axis=1)
eeg = preprocess(MultichannelSignal(clean + 2.0 * rng.standard_normal(clean.shape), 20.0))

# %%
X = build_lag_matrix(eeg.samples, 9)
half = X.n_samples // 2
train = trial_statistics(build_lag_matrix(eeg.samples[:half], 9), s[:half])
model = train_decoder(train)
s_hat = reconstruct(model, build_lag_matrix(eeg.samples[half:], 9))
print(f"shrinkage intensity {model.lam:.3f}")
print(f"held-out correlation {pearson(s_hat, s[half:]):.3f}")
