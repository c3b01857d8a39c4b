"""Naive reference implementations used as test oracles.

Everything here is deliberately written with explicit Python loops over
lists of floats (mat-vec plus scalar softmax), independent of the package's
vectorized code paths.  Only `math` is used for scalar functions.
"""

import math


def dot(x, y):
    s = 0.0
    for a, b in zip(x, y):
        s += a * b
    return s


def cosine(x, y):
    return dot(x, y) / (math.sqrt(dot(x, x)) * math.sqrt(dot(y, y)))


def scalar_softmax(logits):
    m = max(logits)
    exps = [math.exp(l - m) for l in logits]
    z = sum(exps)
    return [e / z for e in exps]


def naive_attend(query, bank, tau):
    return scalar_softmax([cosine(query, slot) / tau for slot in bank])


def naive_readout(weights, bank):
    d = len(bank[0])
    out = [0.0] * d
    for w, slot in zip(weights, bank):
        for j in range(d):
            out[j] += w * slot[j]
    return out


def naive_visual_pathway(char_keys, env_keys, timbre_values, sound_values, v, tau):
    w_char = naive_attend(v, char_keys, tau)
    w_env = naive_attend(v, env_keys, tau)
    timbre = naive_readout(w_char, timbre_values)
    sound = naive_readout(w_env, sound_values)
    combined = [a + b for a, b in zip(timbre, sound)]
    return {"w_char": w_char, "w_env": w_env, "timbre": timbre, "sound": sound, "combined": combined}


def naive_auditory_pathway(timbre_values, sound_values, a, tau):
    w_t = naive_attend(a, timbre_values, tau)
    w_s = naive_attend(a, sound_values, tau)
    timbre = naive_readout(w_t, timbre_values)
    sound = naive_readout(w_s, sound_values)
    combined = [x + y for x, y in zip(timbre, sound)]
    return {"w_t": w_t, "w_s": w_s, "timbre": timbre, "sound": sound, "combined": combined}


def sq_dist(x, y):
    return sum((a - b) ** 2 for a, b in zip(x, y))


def kl(p, q, clamp=1e-12):
    # symmetric clamp inside the logs, matching the taped op
    s = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            s += pi * (math.log(max(pi, clamp)) - math.log(max(qi, clamp)))
    return s


def naive_losses(banks, v_rows, a_rows, timbre_pairs, env_pairs, weights, tau):
    """All five loss terms plus the weighted total, scalar arithmetic only.

    `banks` maps the four bank names to lists of slot lists; `weights` is
    (align, imitation, timbre, environment).
    """
    n = len(a_rows)
    aud = [naive_auditory_pathway(banks["timbre_value"], banks["sound_value"], a, tau) for a in a_rows]
    vis = [
        naive_visual_pathway(
            banks["character_key"], banks["environment_key"],
            banks["timbre_value"], banks["sound_value"], v, tau,
        )
        for v in v_rows
    ]
    rec = sum(sq_dist(a_rows[i], aud[i]["combined"]) for i in range(n)) / n
    align = sum(kl(aud[i]["w_t"], vis[i]["w_char"]) + kl(aud[i]["w_s"], vis[i]["w_env"]) for i in range(n)) / n
    imi = sum(
        sq_dist(aud[i]["timbre"], vis[i]["timbre"]) + sq_dist(aud[i]["sound"], vis[i]["sound"])
        for i in range(n)
    ) / n
    timbre_c = (
        sum(sq_dist(vis[i]["timbre"], vis[j]["timbre"]) for i, j in timbre_pairs) / len(timbre_pairs)
        if timbre_pairs
        else 0.0
    )
    env_c = (
        sum(sq_dist(vis[i]["sound"], vis[j]["sound"]) for i, j in env_pairs) / len(env_pairs)
        if env_pairs
        else 0.0
    )
    w_align, w_imi, w_timbre, w_env = weights
    total = rec + w_align * align + w_imi * imi + w_timbre * timbre_c + w_env * env_c
    return {
        "rec": rec, "align": align, "imi": imi,
        "timbre_c": timbre_c, "env_c": env_c, "total": total,
        "aud": aud, "vis": vis,
    }


def adamw_step(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """Textbook decoupled-decay update on flat float lists; returns new lists."""
    new_p, new_m, new_v = [], [], []
    for pi, gi, mi, vi in zip(p, g, m, v):
        mi = beta1 * mi + (1.0 - beta1) * gi
        vi = beta2 * vi + (1.0 - beta2) * gi * gi
        m_hat = mi / (1.0 - beta1 ** t)
        v_hat = vi / (1.0 - beta2 ** t)
        pi = pi - lr * (m_hat / (math.sqrt(v_hat) + eps) + weight_decay * pi)
        new_p.append(pi)
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v
