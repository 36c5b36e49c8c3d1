"""Inner loops of the two simulators, compiled with numba when available.

Grid coordinates are ``(row, col)``; action codes are shared by both envs:
0 noop, 1 up, 2 down, 3 left, 4 right, 5 toggle_load (warehouse) / attack (skirmish).
"""

from __future__ import annotations

import numpy as np

from .._accel import njit

# ---------------------------------------------------------------- warehouse


@njit
def warehouse_step_kernel(actions, agent_pos, carrying, shelf_pos, shelf_home, shelf_grid, home_grid,
                          requested, goal, delivered):
    """Resolve one joint action in agent-index order, mutating the state arrays.

    A loaded agent may not enter the home cell of any other shelf.
    ``delivered[i]`` receives the shelf id agent ``i`` delivered this step, else -1.
    """
    drow = np.array([0, -1, 1, 0, 0])
    dcol = np.array([0, 0, 0, -1, 1])
    n = agent_pos.shape[0]
    height, width = shelf_grid.shape
    for i in range(n):
        delivered[i] = -1
    for i in range(n):
        a = actions[i]
        r = agent_pos[i, 0]
        c = agent_pos[i, 1]
        if 1 <= a <= 4:
            nr = r + drow[a]
            nc = c + dcol[a]
            if nr < 0 or nr >= height or nc < 0 or nc >= width:
                continue
            blocked = False
            for j in range(n):
                if j != i and agent_pos[j, 0] == nr and agent_pos[j, 1] == nc:
                    blocked = True
            s = carrying[i]
            if s >= 0 and home_grid[nr, nc] >= 0 and home_grid[nr, nc] != s:
                blocked = True
            if blocked:
                continue
            agent_pos[i, 0] = nr
            agent_pos[i, 1] = nc
            if s >= 0:
                shelf_pos[s, 0] = nr
                shelf_pos[s, 1] = nc
                if requested[s] and goal[nr, nc]:
                    hr = shelf_home[s, 0]
                    hc = shelf_home[s, 1]
                    shelf_pos[s, 0] = hr
                    shelf_pos[s, 1] = hc
                    shelf_grid[hr, hc] = s
                    carrying[i] = -1
                    delivered[i] = s
        elif a == 5:
            s = carrying[i]
            if s < 0:
                if shelf_grid[r, c] >= 0:
                    carrying[i] = shelf_grid[r, c]
                    shelf_grid[r, c] = -1
            elif shelf_home[s, 0] == r and shelf_home[s, 1] == c:
                shelf_grid[r, c] = s
                carrying[i] = -1


@njit
def warehouse_mask_kernel(agent_pos, carrying, shelf_home, shelf_grid, home_grid, out):
    drow = np.array([0, -1, 1, 0, 0])
    dcol = np.array([0, 0, 0, -1, 1])
    n = agent_pos.shape[0]
    height, width = shelf_grid.shape
    for i in range(n):
        r = agent_pos[i, 0]
        c = agent_pos[i, 1]
        s = carrying[i]
        out[i, 0] = True
        for a in range(1, 5):
            nr = r + drow[a]
            nc = c + dcol[a]
            ok = 0 <= nr < height and 0 <= nc < width
            if ok:
                for j in range(n):
                    if j != i and agent_pos[j, 0] == nr and agent_pos[j, 1] == nc:
                        ok = False
                if ok and s >= 0 and home_grid[nr, nc] >= 0 and home_grid[nr, nc] != s:
                    ok = False
            out[i, a] = ok
        if s < 0:
            out[i, 5] = shelf_grid[r, c] >= 0
        else:
            out[i, 5] = shelf_home[s, 0] == r and shelf_home[s, 1] == c


@njit
def warehouse_observe_kernel(agent_pos, carrying, shelf_grid, requested, goal, out):
    """Fill ``out[i]`` (length 40) for every agent.

    Layout: four 3x3 channels (agent, shelf, requested shelf, goal) in row-major
    window order, then carrying flag, carried-shelf-requested flag, col/(W-1), row/(H-1).
    """
    n = agent_pos.shape[0]
    height, width = shelf_grid.shape
    for i in range(n):
        for k in range(out.shape[1]):
            out[i, k] = 0.0
        r = agent_pos[i, 0]
        c = agent_pos[i, 1]
        cell = 0
        for dr in range(-1, 2):
            for dc in range(-1, 2):
                rr = r + dr
                cc = c + dc
                if 0 <= rr < height and 0 <= cc < width:
                    shelf = shelf_grid[rr, cc]
                    for j in range(n):
                        if agent_pos[j, 0] == rr and agent_pos[j, 1] == cc:
                            out[i, cell] = 1.0
                            if carrying[j] >= 0:
                                shelf = carrying[j]
                    if shelf >= 0:
                        out[i, 9 + cell] = 1.0
                        if requested[shelf]:
                            out[i, 18 + cell] = 1.0
                    if goal[rr, cc]:
                        out[i, 27 + cell] = 1.0
                cell += 1
        s = carrying[i]
        if s >= 0:
            out[i, 36] = 1.0
            if requested[s]:
                out[i, 37] = 1.0
        out[i, 38] = c / max(width - 1, 1)
        out[i, 39] = r / max(height - 1, 1)


# ---------------------------------------------------------------- skirmish


@njit
def _occupied(pos, health, r, c):
    for j in range(pos.shape[0]):
        if health[j] > 0 and pos[j, 0] == r and pos[j, 1] == c:
            return True
    return False


@njit
def skirmish_step_kernel(actions, pos, health, n_allies, height, width):
    """Allies act in index order, then scripted enemies. Returns (enemies_killed, allies_killed)."""
    drow = np.array([0, -1, 1, 0, 0])
    dcol = np.array([0, 0, 0, -1, 1])
    n_units = pos.shape[0]
    enemies_killed = 0
    allies_killed = 0
    for i in range(n_allies):
        if health[i] <= 0:
            continue
        a = actions[i]
        if 1 <= a <= 4:
            nr = pos[i, 0] + drow[a]
            nc = pos[i, 1] + dcol[a]
            if 0 <= nr < height and 0 <= nc < width and not _occupied(pos, health, nr, nc):
                pos[i, 0] = nr
                pos[i, 1] = nc
        elif a == 5:
            for j in range(n_allies, n_units):
                if health[j] > 0 and abs(pos[j, 0] - pos[i, 0]) <= 1 and abs(pos[j, 1] - pos[i, 1]) <= 1:
                    health[j] -= 1
                    if health[j] == 0:
                        enemies_killed += 1
                    break
    for j in range(n_allies, n_units):
        if health[j] <= 0:
            continue
        target = -1
        for i in range(n_allies):
            if health[i] > 0 and abs(pos[j, 0] - pos[i, 0]) <= 1 and abs(pos[j, 1] - pos[i, 1]) <= 1:
                target = i
                break
        if target >= 0:
            health[target] -= 1
            if health[target] == 0:
                allies_killed += 1
            continue
        best = -1
        best_d = 1 << 30
        for i in range(n_allies):
            if health[i] > 0:
                d = abs(pos[j, 0] - pos[i, 0]) + abs(pos[j, 1] - pos[i, 1])
                if d < best_d:
                    best_d = d
                    best = i
        if best < 0:
            continue
        dr = pos[best, 0] - pos[j, 0]
        dc = pos[best, 1] - pos[j, 1]
        sr = 1 if dr > 0 else (-1 if dr < 0 else 0)
        sc = 1 if dc > 0 else (-1 if dc < 0 else 0)
        horizontal_first = abs(dc) >= abs(dr)
        for attempt in range(2):
            use_h = horizontal_first if attempt == 0 else not horizontal_first
            if use_h:
                if sc == 0:
                    continue
                nr = pos[j, 0]
                nc = pos[j, 1] + sc
            else:
                if sr == 0:
                    continue
                nr = pos[j, 0] + sr
                nc = pos[j, 1]
            if 0 <= nr < height and 0 <= nc < width and not _occupied(pos, health, nr, nc):
                pos[j, 0] = nr
                pos[j, 1] = nc
                break
    return enemies_killed, allies_killed


@njit
def skirmish_mask_kernel(pos, health, n_allies, height, width, out):
    drow = np.array([0, -1, 1, 0, 0])
    dcol = np.array([0, 0, 0, -1, 1])
    n_units = pos.shape[0]
    for i in range(n_allies):
        for a in range(out.shape[1]):
            out[i, a] = False
        out[i, 0] = True
        if health[i] <= 0:
            continue
        for a in range(1, 5):
            nr = pos[i, 0] + drow[a]
            nc = pos[i, 1] + dcol[a]
            out[i, a] = 0 <= nr < height and 0 <= nc < width and not _occupied(pos, health, nr, nc)
        for j in range(n_allies, n_units):
            if health[j] > 0 and abs(pos[j, 0] - pos[i, 0]) <= 1 and abs(pos[j, 1] - pos[i, 1]) <= 1:
                out[i, 5] = True
                break


@njit
def skirmish_observe_kernel(pos, health, n_allies, height, width, max_health, sight, out):
    """Fill ``out[i]`` for every ally: own col, row, health, then 5 features per visible unit.

    Visible units (living, Chebyshev distance <= sight) are sorted by squared
    Euclidean distance, ties by unit index; remaining slots are zero.
    """
    n_units = pos.shape[0]
    dist = np.empty(n_units, dtype=np.int64)
    order = np.empty(n_units, dtype=np.int64)
    for i in range(n_allies):
        for k in range(out.shape[1]):
            out[i, k] = 0.0
        if health[i] <= 0:
            continue
        out[i, 0] = pos[i, 1] / max(width - 1, 1)
        out[i, 1] = pos[i, 0] / max(height - 1, 1)
        out[i, 2] = health[i] / max_health
        m = 0
        for j in range(n_units):
            if j == i or health[j] <= 0:
                continue
            dr = pos[j, 0] - pos[i, 0]
            dc = pos[j, 1] - pos[i, 1]
            if abs(dr) > sight or abs(dc) > sight:
                continue
            d = dr * dr + dc * dc
            # insertion sort keeps (distance, index) order
            k = m
            while k > 0 and dist[k - 1] > d:
                dist[k] = dist[k - 1]
                order[k] = order[k - 1]
                k -= 1
            dist[k] = d
            order[k] = j
            m += 1
        for k in range(m):
            j = order[k]
            base = 3 + 5 * k
            out[i, base] = 1.0
            out[i, base + 1] = (pos[j, 1] - pos[i, 1]) / sight
            out[i, base + 2] = (pos[j, 0] - pos[i, 0]) / sight
            out[i, base + 3] = health[j] / max_health
            out[i, base + 4] = 1.0 if j >= n_allies else 0.0
