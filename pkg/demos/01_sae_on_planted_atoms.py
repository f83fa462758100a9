"""
Sparse autoencoder on planted atoms
===================================

Synthetic features are sparse sums of random unit atoms. A BatchTopK SAE
trained on them should reconstruct well and put decoder columns on the atoms.
"""

import numpy as np

from concept_forgetting.sae import SaeConfig, dead_rate, encode, r2, train_sae
from concept_forgetting.synth import SynthSpec, align_latents_to_atoms, generate

# 16-dim features built from 8 atoms, 3 active per sample
data = generate(SynthSpec(d=16, n_atoms=8, k_true=3, n_train=2000, n_test=500, seed=0))
train = data.matrix("train")

# K=10 of 32 latents per sample at inference, batch-global top-(B*K) in training
model = train_sae(train, SaeConfig(input_dim=16, k=10, seed=0))
print("latent dim:", model.latent_dim)
print("train R2:   %.4f" % r2(model, train))
print("test R2:    %.4f" % r2(model, data.matrix("test")))
print("dead rate:  %.3f" % dead_rate(model, train))

# every latent row keeps at most K nonzeros
z = encode(model, data.matrix("test")).data
print("max nonzeros per row:", np.count_nonzero(z, axis=1).max())

# which latents point at which atom (cosine >= 0.7)
aligned = align_latents_to_atoms(model.W_dec, data.dictionary, threshold=0.7)
print("atoms covered: %d of 8" % len(set(aligned.values())))
for latent, atom in sorted(aligned.items()):
    print("  latent %2d -> atom %d" % (latent, atom))
