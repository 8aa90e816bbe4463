"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond plain data types, so each oracle can
disagree with the package.
"""

import numpy as np


# -- attention structure -----------------------------------------------------------

def token_list(N):
    """Tokens in layout order as tuples: ("cls", lead) then ("beat", lead, beat)."""
    toks = [("cls", i) for i in range(12)]
    toks += [("beat", i, j) for i in range(12) for j in range(N)]
    return toks


def brute_allow(N, masked, padding, variant):
    """Allow matrix from the semantic sets, written token by token.

    ``masked`` and ``padding`` are sets of (lead, beat) pairs.
    """
    toks = token_list(N)
    T = len(toks)
    A = np.zeros((T, T), dtype=bool)

    def usable(t):
        return t[0] == "cls" or (t[1], t[2]) not in padding

    for r, row in enumerate(toks):
        if not usable(row):
            continue
        for c, col in enumerate(toks):
            if not usable(col):
                continue
            if variant == "full":
                ok = True
            elif row[0] == "cls":
                same_lead_beat = col[0] == "beat" and col[1] == row[1]
                ok = col == row or (same_lead_beat and variant not in ("no_iv", "no_ic_iv"))
            else:
                lead, beat = row[1], row[2]
                own_cls = col == ("cls", lead)
                if (lead, beat) in masked:
                    if variant in ("no_ic", "no_ic_iv"):
                        core = col == row
                    else:
                        core = col[0] == "beat" and col[2] == beat
                else:
                    core = col[0] == "beat" and col[1] == lead
                ok = core or (own_cls and variant not in ("no_iv", "no_ic_iv"))
            A[r, c] = ok
    return A


def brute_encoder_allow(N, masked, padding, variant, policy):
    """Encoder allow matrix over the visible tokens (cls, then unmasked valid beats)."""
    toks = token_list(N)
    full = brute_allow(N, masked, padding, variant)
    keep = [k for k, t in enumerate(toks)
            if t[0] == "cls" or ((t[1], t[2]) not in masked and (t[1], t[2]) not in padding)]
    A = full[np.ix_(keep, keep)]
    if policy == "paper_literal":
        for r, k in enumerate(keep):
            if toks[k][0] == "beat":
                A[r, :] = True
    return A, keep


def influence_set(p, N, masked, padding, variant, policy, enc_layers, dec_layers):
    """Layout positions whose input beat values can reach the decoder output at ``p``.

    Walks the allow graphs backwards: through the decoder layers, then from decoder
    positions fed by the encoder back through the encoder layers. Padding rows that the
    model patches to self-attention only reach themselves.
    """
    toks = token_list(N)
    dec = brute_allow(N, masked, padding, variant)
    T = len(toks)
    for q in range(T):
        if not dec[q].any():
            dec[q, q] = True
    reach = {p}
    for _ in range(dec_layers):
        reach |= {c for r in reach for c in np.flatnonzero(dec[r])}
    enc, keep = brute_encoder_allow(N, masked, padding, variant, policy)
    slot = {k: s for s, k in enumerate(keep)}
    front = {slot[q] for q in reach if q in slot}
    for _ in range(enc_layers):
        front |= {c for r in front for c in np.flatnonzero(enc[r])}
    return {keep[s] for s in front if toks[keep[s]][0] == "beat"}


# -- metrics -------------------------------------------------------------------------

def pair_auc(scores, labels):
    """Exact AUC by counting every positive/negative pair; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(pos) * len(neg))


# -- hierarchical head -----------------------------------------------------------------

def hug_identity_reference(c):
    """Group outputs and the mean feature for identity maps, in plain numpy.

    ``c`` is ``(12, d)``; returns ``(outputs (7, d), f_g (d,))``.
    """
    c = np.asarray(c, dtype=np.float64)
    g1 = (c[0] + c[1] + c[2]) / 3
    g2 = (c[3] + c[4] + c[5]) / 3
    g3 = (c[6] + c[7] + c[8] + c[9] + c[10] + c[11]) / 6
    p12 = (g1 + g2) / 2
    p13 = (g1 + g3) / 2
    p23 = (g2 + g3) / 2
    top = (p12 + p13 + p23) / 3
    f_g = (g1 + g2 + g3 + p12 + p13 + p23 + top) / 7
    return np.stack([g1, g2, g3, p12, p13, p23, top]), f_g


def hug_identity_coefficients():
    """Weight of each lead's cls vector in f_g when every map is the identity."""
    return hug_identity_reference(np.eye(12))[1]
