"""Proposal schemes for indel histories on a single edge, with their exact
densities.

Two schemes are used by the sampler.  For an edge whose child is alive, the
history must avoid killing events and end at a given intermediate length; it
is built from events in the intermediate region only, and a forced final
event fixes the length if needed.  For an edge whose child is dead, events are
drawn from the model until the first kill, and a kill is appended uniformly in
the remaining time if none arises.
"""

from __future__ import annotations

import math

import numpy as np

from .model import (
    EndRegions,
    EventKind,
    IndelEvent,
    IndelHistory,
    IndelParams,
    classify_event,
    indel_length_logpmf,
)
from .simulate import _event_rate, sample_model_event


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _log_trunc(r: float, room: int) -> float:
    """log(1 - (1-r)^room), the truncation mass of a geometric on 1..room."""
    if r >= 1.0:
        return 0.0
    return math.log1p(-((1.0 - r) ** room))


# ---------------------------------------------------------------------------
# no-kill proposals


def propose_nokill_history(n0: int, n_target: int, T: float, end: EndRegions, params: IndelParams,
                           rng: np.random.Generator) -> tuple[IndelHistory, float] | None:
    """Draw a kill-free history from ``n0`` to ``n_target`` on an edge of
    length ``T``.  Returns ``(history, log density)``, or ``None`` when a
    natural deletion would empty the intermediate region (a degenerate draw,
    treated as a rejected proposal)."""
    if n0 < 1 or n_target < 1 or not T > 0:
        raise ValueError("need n0, n_target >= 1 and T > 0")
    lam, mu, r = params.lam, params.mu, params.r
    rl = end.r_left
    t, n = 0.0, n0
    events = []
    while True:
        zeta = (n + 1) * lam + n * mu
        dt = rng.exponential(1.0 / zeta) if zeta > 0 else math.inf
        if t + dt < T:
            t += dt
            if rng.random() * zeta < (n + 1) * lam:
                s = rl + int(rng.integers(n + 1))
                length = int(rng.geometric(r))
                events.append(IndelEvent(t, EventKind.INS_INTERMEDIATE, s, length))
                n += length
            else:
                s = rl + int(rng.integers(n))
                room = rl + n - s
                length = _sample_trgeom(rng, r, room)
                if length >= n:
                    return None
                events.append(IndelEvent(t, EventKind.DEL_INTERMEDIATE, s, length))
                n -= length
            continue
        if n != n_target:
            t_new = t + (T - t) * rng.random()
            if t_new <= t:
                return None
            if n < n_target:
                s = rl + int(rng.integers(n + 1))
                events.append(IndelEvent(t_new, EventKind.INS_INTERMEDIATE, s, n_target - n))
            else:
                s = rl + int(rng.integers(n_target + 1))
                events.append(IndelEvent(t_new, EventKind.DEL_INTERMEDIATE, s, n - n_target))
        h = IndelHistory(tuple(events))
        return h, eval_nokill_density(h, n0, T, end, params)


def _sample_trgeom(rng: np.random.Generator, r: float, room: int) -> int:
    if r >= 1.0 or room == 1:
        return 1
    u = rng.random()
    x = math.ceil(math.log1p(-u * (1.0 - (1.0 - r) ** room)) / math.log1p(-r))
    return min(max(x, 1), room)


def _natural_nokill_term(e: IndelEvent, n: int, rl: int, params: IndelParams) -> float:
    """Log density factor of a naturally drawn intermediate event (without
    the waiting-time term)."""
    lam, mu, r = params.lam, params.mu, params.r
    if e.kind is EventKind.INS_INTERMEDIATE:
        if not rl <= e.position <= rl + n:
            return -math.inf
        return _log(lam) + indel_length_logpmf(e.length, r)
    if not rl <= e.position < rl + n:
        return -math.inf
    room = rl + n - e.position
    if e.length > room or e.length >= n:
        return -math.inf
    return _log(mu) + indel_length_logpmf(e.length, r) - _log_trunc(r, room)


def eval_nokill_density(h: IndelHistory, n0: int, T: float, end: EndRegions, params: IndelParams) -> float:
    """Log density of ``h`` under :func:`propose_nokill_history` (the target
    length is the replay end point of ``h``)."""
    if h.kill:
        raise ValueError("history contains a killing event")
    if any(e.kind is not EventKind.INS_INTERMEDIATE and e.kind is not EventKind.DEL_INTERMEDIATE
           for e in h.events):
        return -math.inf
    lam, mu = params.lam, params.mu
    rl = end.r_left
    ev = h.events
    k = len(ev)
    if k and ev[-1].time >= T:
        return -math.inf
    ns = h.lengths(n0)
    # cumulative log density of the first i natural events (waits included)
    acc = 0.0
    prefix = [0.0]
    t_prev = 0.0
    for i, e in enumerate(ev):
        n = ns[i]
        zeta = (n + 1) * lam + n * mu
        acc += -zeta * (e.time - t_prev) + _natural_nokill_term(e, n, rl, params)
        prefix.append(acc)
        t_prev = e.time
    n_last = ns[-1]
    natural = prefix[k] - ((n_last + 1) * lam + n_last * mu) * (T - t_prev)
    if k == 0:
        return natural
    e = ev[-1]
    n_before = ns[k - 1]
    t_before = ev[k - 2].time if k >= 2 else 0.0
    zeta = (n_before + 1) * lam + n_before * mu
    forced = prefix[k - 1] - zeta * (T - t_before) - math.log(T - t_before)
    if e.kind is EventKind.INS_INTERMEDIATE:
        ok = rl <= e.position <= rl + n_before
        forced += -math.log(n_before + 1)
    else:
        ok = rl <= e.position <= rl + n_last
        forced += -math.log(n_last + 1)
    if not ok:
        forced = -math.inf
    return float(np.logaddexp(forced, natural))


# ---------------------------------------------------------------------------
# kill proposals


def _appended_kind_weights(end: EndRegions, n: int, params: IndelParams) -> list[tuple[EventKind, float]]:
    lam, mu, r = params.lam, params.mu, params.r
    R = end.total
    if lam == 0 and mu == 0:
        lam = mu = 1.0  # limiting proportions
    w = [(EventKind.INS_END, (R - 2) * lam), (EventKind.DEL_IN_END, R * mu),
         (EventKind.DEL_FROM_BEFORE, mu * (1.0 - r) / r), (EventKind.DEL_INTO_RIGHT_END, n * mu)]
    tot = sum(x for _, x in w)
    return [(k, x / tot) for k, x in w]


def _sample_appended_kill(end: EndRegions, n: int, params: IndelParams, rng: np.random.Generator):
    r = params.r
    rl, R = end.r_left, end.total
    u = rng.random()
    kind = None
    for kind, p in _appended_kind_weights(end, n, params):
        if u < p:
            break
        u -= p
    if kind is EventKind.INS_END:
        j = int(rng.integers(R - 2))
        s = 1 + j if j < rl - 1 else rl + n + 1 + (j - (rl - 1))
        return kind, s, int(rng.geometric(r))
    if kind is EventKind.DEL_IN_END:
        j = int(rng.integers(R))
        s = j if j < rl else rl + n + (j - rl)
        return kind, s, int(rng.geometric(r))
    if kind is EventKind.DEL_FROM_BEFORE:
        i = int(rng.geometric(r))
        return kind, -i, i + int(rng.geometric(r))
    s = rl + int(rng.integers(n))
    return kind, s, rl + n - s + int(rng.geometric(r))


def _appended_kill_logprob(e: IndelEvent, end: EndRegions, n: int, params: IndelParams) -> float:
    r = params.r
    rl, R = end.r_left, end.total
    weights = dict(_appended_kind_weights(end, n, params))
    lw = _log(weights[e.kind])
    if e.kind is EventKind.INS_END:
        return lw - math.log(R - 2) + indel_length_logpmf(e.length, r)
    if e.kind is EventKind.DEL_IN_END:
        return lw - math.log(R) + indel_length_logpmf(e.length, r)
    if e.kind is EventKind.DEL_FROM_BEFORE:
        i = -e.position
        return lw + indel_length_logpmf(i, r) + indel_length_logpmf(e.length - i, r)
    room = rl + n - e.position
    if e.length <= room:
        return -math.inf
    return lw - math.log(n) + indel_length_logpmf(e.length - room, r)


def propose_kill_history(n0: int, T: float, end: EndRegions, params: IndelParams,
                         rng: np.random.Generator) -> tuple[IndelHistory, float]:
    """Draw a history ending in exactly one killing event."""
    if n0 < 1 or not T > 0:
        raise ValueError("need n0 >= 1 and T > 0")
    t, n = 0.0, n0
    events = []
    while True:
        eta = _event_rate(end, n, params)
        dt = rng.exponential(1.0 / eta) if eta > 0 else math.inf
        if t + dt < T:
            t += dt
            kind, s, length = sample_model_event(end, n, params, rng, eta)
            events.append(IndelEvent(t, kind, s, length))
            if kind.killing:
                break
            n += kind.sign * length
            continue
        t_new = t + (T - t) * rng.random()
        if t_new <= t:  # measure-zero tie; nudge inside the interval
            t_new = math.nextafter(t, T)
        kind, s, length = _sample_appended_kill(end, n, params, rng)
        events.append(IndelEvent(t_new, kind, s, length))
        break
    h = IndelHistory(tuple(events))
    return h, eval_kill_density(h, n0, T, end, params)


def eval_kill_density(h: IndelHistory, n0: int, T: float, end: EndRegions, params: IndelParams) -> float:
    """Log density of ``h`` under :func:`propose_kill_history`."""
    if not h.kill:
        raise ValueError("history must end in a killing event")
    lam, mu = params.lam, params.mu
    log_lam, log_mu, r = _log(lam), _log(mu), params.r
    ev = h.events
    k = len(ev)
    if ev[-1].time >= T:
        return -math.inf
    ns = h.lengths(n0)
    n = n0
    acc = 0.0
    prefix = [0.0]
    t_prev = 0.0
    for i, e in enumerate(ev):
        if classify_event(e.kind.sign, e.position, e.length, end, n) is not e.kind:
            return -math.inf
        acc += -_event_rate(end, n, params) * (e.time - t_prev)
        acc += (log_lam if e.kind.sign > 0 else log_mu) + indel_length_logpmf(e.length, r)
        prefix.append(acc)
        t_prev = e.time
        if i < k - 1:
            n = ns[i + 1]
    natural = prefix[k]
    n_before = ns[k - 1]
    t_before = ev[k - 2].time if k >= 2 else 0.0
    appended = (prefix[k - 1] - _event_rate(end, n_before, params) * (T - t_before)
                - math.log(T - t_before) + _appended_kill_logprob(ev[-1], end, n_before, params))
    return float(np.logaddexp(natural, appended))
