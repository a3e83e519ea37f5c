"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np

from zkfl_sim.ledger import GENESIS_AUTHOR, Block, BlockStatus, DagLedger, block_id


def brute_median(values):
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2


def brute_nearest_rank(values, percent):
    """Smallest sample value with at least ``percent`` % of the samples at or below it."""
    n = len(values)
    for v in sorted(values):
        if 100 * sum(1 for x in values if x <= v) >= percent * n:
            return v
    raise AssertionError("unreachable")


def reachability(ledger: DagLedger):
    """(ids, R) where R[i, j] means block j is reachable from block i via parent edges."""
    ids = list(ledger.blocks)
    index = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    reach = np.eye(n, dtype=bool)
    for bid, block in ledger.blocks.items():
        for p in block.parents:
            reach[index[bid], index[p]] = True
    for k in range(n):
        reach |= reach[:, k:k + 1] & reach[k:k + 1, :]
    return ids, index, reach


def brute_aggregated_weight(ledger: DagLedger, bid, stakes) -> float:
    ids, index, reach = reachability(ledger)
    j = index[bid]
    authors = {ledger.blocks[bid].author}
    for i, other in enumerate(ids):
        if i != j and reach[i, j] and ledger.blocks[other].status is not BlockStatus.REVOKED:
            authors.add(ledger.blocks[other].author)
    return float(sum(stakes[a] for a in authors if a != GENESIS_AUTHOR))


def brute_all_weights(ledger: DagLedger, stakes) -> dict:
    ids, index, reach = reachability(ledger)
    out = {}
    for j, bid in enumerate(ids):
        authors = {ledger.blocks[bid].author}
        for i, other in enumerate(ids):
            if i != j and reach[i, j] and ledger.blocks[other].status is not BlockStatus.REVOKED:
                authors.add(ledger.blocks[other].author)
        out[bid] = float(sum(stakes[a] for a in authors if a != GENESIS_AUTHOR))
    return out


def brute_suspects(ledger: DagLedger, tips) -> set:
    ids, index, reach = reachability(ledger)
    tip_rows = [index[t] for t in tips]
    out = set()
    for j, bid in enumerate(ids):
        if ledger.blocks[bid].status not in (BlockStatus.TIP, BlockStatus.UNCONFIRMED):
            continue
        if not any(reach[i, j] for i in tip_rows):
            out.add(bid)
    return out


def random_dag(rng, n_blocks: int, n_authors: int, revoke_prob: float = 0.1,
               confirm_threshold: float = 2.0):
    """Random ledger plus its stake vector.

    The default threshold above one keeps every block unconfirmed so that
    revocation stays legal; pass a lower one to exercise confirmation.
    """
    stakes = rng.uniform(0.1, 1.0, size=n_authors)
    stakes = stakes / stakes.sum()
    ledger = DagLedger(confirm_threshold)
    ledger.insert_genesis(int(rng.integers(1, 4)), np.zeros(2), stake_view=lambda: stakes)
    for k in range(n_blocks):
        alive = [b for b, blk in ledger.blocks.items() if blk.status is not BlockStatus.REVOKED]
        n_par = int(rng.integers(1, min(4, len(alive)) + 1))
        # bias towards recent blocks so the DAG is deep, not a star on genesis
        weights = np.arange(1, len(alive) + 1, dtype=float) ** 2
        pick = rng.choice(len(alive), size=n_par, replace=False, p=weights / weights.sum())
        parents = [alive[i] for i in sorted(pick)]
        author = int(rng.integers(0, n_authors))
        model = rng.normal(size=2)
        bid = block_id(author, k, model, b"", parents, salt=k)
        ledger.attach_block(Block(bid, author, k, model, None, parents))
        if rng.random() < revoke_prob:
            # sometimes the new block, sometimes an older one that already has children
            pool = [b for b, blk in ledger.blocks.items()
                    if blk.status in (BlockStatus.TIP, BlockStatus.UNCONFIRMED)]
            ledger.revoke(bid if rng.random() < 0.5 else pool[int(rng.integers(0, len(pool)))])
    return ledger, stakes
