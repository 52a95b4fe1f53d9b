"""Pure numpy grouped convolution; same contract as the compiled ``_gconv``."""

import numpy as np


def _gather_index(ptr, offs, N):
    gidx = (np.arange(N)[:, None] + offs[None, :]) % N
    return gidx


def _patch_sums(ptr, nbr, offs, wn, mono, inp):
    N = inp.shape[0]
    gidx = _gather_index(ptr, offs, N)
    G = inp[gidx, nbr[None, :], :]                    # (N, P, C)
    A = wn[None, :, None] * mono                       # (N, P, 10)
    T = G[:, :, :, None] * A[:, :, None, :]            # (N, P, C, 10)
    S = np.add.reduceat(T, ptr[:-1], axis=1)           # (N, V, C, 10)
    return S, A, gidx


def gconv_forward(ptr, nbr, offs, wn, mono, inp, W, out):
    S, _, _ = _patch_sums(ptr, nbr, offs, wn, mono, inp)
    out[...] = np.einsum("nvcp,ocp->nvo", S, W, optimize=True)


def gconv_backward(ptr, nbr, offs, wn, mono, inp, W, gout, ginp, gW):
    S, A, gidx = _patch_sums(ptr, nbr, offs, wn, mono, inp)
    gW += np.einsum("nvo,nvcp->ocp", gout, S, optimize=True)
    gS = np.einsum("nvo,ocp->nvcp", gout, W, optimize=True)
    owner = np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))
    gG = np.einsum("npcq,npq->npc", gS[:, owner], A, optimize=True)
    np.add.at(ginp, (gidx, nbr[None, :]), gG)
