"""Event-loop kernels for the FIFO queueing network.

Each microservice is a single FIFO server whose speed equals its core
allocation (core-seconds of work per second). A request walks a precomputed
path of stages; finishing a stage moves it to the tail of the next stage's
queue at that instant. Everything here works on preallocated arrays so it
compiles under numba.
"""
import numpy as np

from .._jit import njit


@njit
def advance_step(t0, dt, alloc, demand, paths, path_lengths, new_paths, timeout,
                 req_arrival, req_path, req_pos, req_rem, free_stack, free_top,
                 queue, q_head, q_len,
                 out_latency, received, departed, cpu_used, area):
    """Advance the network from ``t0`` to ``t0 + dt``.

    New requests arrive evenly spaced over the interval. Requests older than
    ``timeout`` at the end of the interval are dropped. Per-step counters
    (``received``, ``departed``, ``cpu_used``, ``area``) are accumulated in
    place and must be zeroed by the caller.

    Returns ``(n_completed, n_failed)``; the first ``n_completed`` entries of
    ``out_latency`` hold end-to-end latencies in seconds.
    """
    m = alloc.shape[0]
    cap = queue.shape[1]
    t = t0
    t_end = t0 + dt
    n_new = new_paths.shape[0]
    spacing = dt / n_new if n_new > 0 else 0.0
    k_arr = 0
    n_done = 0

    while True:
        ta = t0 + k_arr * spacing if k_arr < n_new else np.inf
        tc = np.inf
        ic = -1
        for i in range(m):
            if q_len[i] > 0:
                r = queue[i, q_head[i]]
                tt = t + req_rem[r] / alloc[i]
                if tt < tc:
                    tc = tt
                    ic = i
        arrival = ta <= tc
        tn = ta if arrival else tc
        if tn > t_end:
            tn = t_end

        h = tn - t
        if h > 0.0:
            for i in range(m):
                if q_len[i] > 0:
                    r = queue[i, q_head[i]]
                    work = h * alloc[i]
                    if work > req_rem[r]:
                        work = req_rem[r]
                    req_rem[r] -= work
                    cpu_used[i] += work
                    area[i] += q_len[i] * h
            t = tn
        if tn >= t_end:
            break

        if arrival:
            top = free_top[0] - 1
            r = free_stack[top]
            free_top[0] = top
            p = new_paths[k_arr]
            req_arrival[r] = t
            req_path[r] = p
            req_pos[r] = 0
            node = paths[p, 0]
            req_rem[r] = demand[node]
            queue[node, (q_head[node] + q_len[node]) % cap] = r
            q_len[node] += 1
            received[node] += 1
            k_arr += 1
        else:
            r = queue[ic, q_head[ic]]
            q_head[ic] = (q_head[ic] + 1) % cap
            q_len[ic] -= 1
            req_rem[r] = 0.0
            departed[ic] += 1
            p = req_path[r]
            pos = req_pos[r] + 1
            if pos >= path_lengths[p]:
                out_latency[n_done] = t - req_arrival[r]
                n_done += 1
                free_stack[free_top[0]] = r
                free_top[0] += 1
            else:
                req_pos[r] = pos
                node = paths[p, pos]
                req_rem[r] = demand[node]
                queue[node, (q_head[node] + q_len[node]) % cap] = r
                q_len[node] += 1
                received[node] += 1

    n_failed = 0
    for i in range(m):
        n = q_len[i]
        head = q_head[i]
        kept = 0
        for j in range(n):
            r = queue[i, (head + j) % cap]
            if t_end - req_arrival[r] > timeout:
                n_failed += 1
                free_stack[free_top[0]] = r
                free_top[0] += 1
            else:
                queue[i, (head + kept) % cap] = r
                kept += 1
        q_len[i] = kept
    return n_done, n_failed


@njit
def nearest_rank(sorted_values, percentiles, out):
    """Nearest-rank percentiles of an ascending array (non-empty)."""
    n = sorted_values.shape[0]
    for j in range(percentiles.shape[0]):
        # tolerance keeps e.g. 99.9% of 1000 at rank 999, not 1000
        rank = int(np.ceil(percentiles[j] * n / 100.0 - 1e-9))
        if rank < 1:
            rank = 1
        if rank > n:
            rank = n
        out[j] = sorted_values[rank - 1]
    return out
