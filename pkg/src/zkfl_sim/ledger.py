"""DAG ledger: blocks, statuses, aggregated weight and reachability queries."""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    CannotRevokeConfirmed,
    DanglingParent,
    DuplicateBlock,
    InvalidState,
    NotFound,
    RevokedParent,
)

BlockId = bytes

GENESIS_AUTHOR = -1


class BlockStatus(Enum):
    TIP = "Tip"
    UNCONFIRMED = "Unconfirmed"
    CONFIRMED = "Confirmed"
    REVOKED = "Revoked"


def block_id(author: int, epoch: int, model: np.ndarray, bundle_digest: bytes,
             parents: Sequence[BlockId], salt: int = 0) -> BlockId:
    """sha256 over a fixed-layout serialization of the block contents."""
    h = hashlib.sha256(b"zkfl/block/v1")
    h.update(struct.pack("<qqq", author, epoch, salt))
    model = np.ascontiguousarray(model, dtype="<f8")
    h.update(struct.pack("<q", model.size))
    h.update(model.tobytes())
    h.update(bundle_digest)
    h.update(struct.pack("<q", len(parents)))
    for p in parents:
        h.update(p)
    return h.digest()


@dataclass(eq=False)
class Block:
    id: BlockId
    author: int
    epoch: int
    model: np.ndarray
    bundle: object
    parents: list
    status: BlockStatus = BlockStatus.TIP
    is_genesis: bool = False
    confirmed_epoch: Optional[int] = None


@dataclass(eq=False)
class DagLedger:
    """Append-only DAG.

    ``stake_view`` is a zero-argument callable returning the current stake
    weights indexed by author; the engine swaps the underlying vector after
    every slash or accrual, so the ledger always reads fresh values.
    """

    confirm_threshold: float = 0.5
    stake_view: Callable[[], Sequence[float]] = lambda: ()
    blocks: dict = field(default_factory=dict)
    children: dict = field(default_factory=dict)
    tips: set = field(default_factory=set)
    genesis: list = field(default_factory=list)
    unconfirmed: set = field(default_factory=set)
    _position: dict = field(default_factory=dict, repr=False)  # insertion order

    # construction ---------------------------------------------------------
    def insert_genesis(self, count: int, model: np.ndarray, stake_view=None) -> list:
        if self.blocks:
            raise InvalidState("genesis can only be inserted into an empty ledger")
        if count < 1:
            raise InvalidState("genesis count must be at least 1")
        if stake_view is not None:
            self.stake_view = stake_view
        for i in range(count):
            bid = block_id(GENESIS_AUTHOR, 0, model, b"genesis", [], salt=i)
            self.blocks[bid] = Block(bid, GENESIS_AUTHOR, 0, np.array(model, dtype=float),
                                     None, [], BlockStatus.CONFIRMED, True, 0)
            self.children[bid] = set()
            self._position[bid] = len(self._position)
            self.genesis.append(bid)
        return list(self.genesis)

    def attach_block(self, block: Block) -> None:
        if block.id in self.blocks:
            raise DuplicateBlock(block.id.hex())
        for p in block.parents:
            parent = self.blocks.get(p)
            if parent is None:
                raise DanglingParent(p.hex())
            if parent.status is BlockStatus.REVOKED:
                raise RevokedParent(p.hex())
        block.status = BlockStatus.TIP
        self.blocks[block.id] = block
        self.children[block.id] = set()
        self._position[block.id] = len(self._position)
        self.tips.add(block.id)
        for p in block.parents:
            self.children[p].add(block.id)
            self.tips.discard(p)
            parent = self.blocks[p]
            if parent.status is BlockStatus.TIP:
                parent.status = BlockStatus.UNCONFIRMED
                self.unconfirmed.add(p)

    # lookups ----------------------------------------------------------------
    def get(self, bid: BlockId) -> Block:
        try:
            return self.blocks[bid]
        except KeyError:
            raise NotFound(bid.hex()) from None

    def __contains__(self, bid):
        return bid in self.blocks

    def __len__(self):
        return len(self.blocks)

    def sorted_tips(self) -> list:
        return sorted(self.tips)

    # tip selection ------------------------------------------------------------
    def select_tips_random(self, k_t: int, rng, pool: Optional[Iterable[BlockId]] = None) -> list:
        """Uniform sample of ``k_t`` distinct tips, or the genesis list if none.

        ``pool`` restricts sampling to a snapshot of the tip set; revoked
        entries are dropped from it.
        """
        if pool is None:
            candidates = self.sorted_tips()
        else:
            candidates = sorted(b for b in pool if self.blocks[b].status is not BlockStatus.REVOKED)
        if not candidates:
            return list(self.genesis)
        take = min(k_t, len(candidates))
        idx = rng.choice(len(candidates), size=take, replace=False)
        return [candidates[i] for i in idx]

    def rank_and_select_parents(self, candidates, k_v: int, verify) -> list:
        """Keep candidates that verify, order by (loss, id), return the best ``k_v``.

        ``verify`` maps a block id to its declared loss, or ``None`` on failure.
        """
        scored = []
        for bid in candidates:
            loss = verify(bid)
            if loss is not None:
                scored.append((loss, bid))
        if not scored:
            return [self.genesis[0]]
        scored.sort()
        return [bid for _, bid in scored[:k_v]]

    # weights --------------------------------------------------------------------
    def future_cone(self, bid: BlockId) -> set:
        self.get(bid)
        seen = set()
        cone = set()
        queue = deque(sorted(self.children[bid]))
        while queue:
            cur = queue.popleft()
            if cur in seen:
                continue
            seen.add(cur)
            if self.blocks[cur].status is not BlockStatus.REVOKED:
                cone.add(cur)
            queue.extend(sorted(self.children[cur]))
        return cone

    def aggregated_weight(self, bid: BlockId) -> float:
        block = self.get(bid)
        authors = {block.author}
        authors.update(self.blocks[c].author for c in self.future_cone(bid))
        return self._weight_of(authors)

    def _weight_of(self, authors) -> float:
        stakes = self.stake_view()
        return float(sum(stakes[a] for a in sorted(authors) if a != GENESIS_AUTHOR))

    def _cone_author_masks(self) -> dict:
        """Bitmask of non-revoked authors strictly above each block that sits above
        an unconfirmed one, filled in one pass from the newest block down.
        """
        region = set()
        stack = list(self.unconfirmed)
        while stack:
            cur = stack.pop()
            if cur not in region:
                region.add(cur)
                stack.extend(self.children[cur])
        masks = {}
        for bid in sorted(region, key=self._position.__getitem__, reverse=True):
            mask = 0
            for c in self.children[bid]:
                child = self.blocks[c]
                mask |= masks[c]
                if child.status is not BlockStatus.REVOKED and child.author != GENESIS_AUTHOR:
                    mask |= 1 << child.author
            masks[bid] = mask
        return masks

    def run_confirmation(self, epoch: Optional[int] = None) -> list:
        if not self.unconfirmed:
            return []
        masks = self._cone_author_masks()
        newly = []
        for bid in sorted(self.unconfirmed):
            block = self.blocks[bid]
            mask = masks[bid]
            if block.author != GENESIS_AUTHOR:
                mask |= 1 << block.author
            authors = [a for a in range(mask.bit_length()) if mask >> a & 1]
            if self._weight_of(authors) >= self.confirm_threshold:
                block.status = BlockStatus.CONFIRMED
                block.confirmed_epoch = epoch
                newly.append(bid)
        self.unconfirmed.difference_update(newly)
        return newly

    # reachability ------------------------------------------------------------------
    def ancestor_closure(self, roots: Iterable[BlockId]) -> set:
        closure = set()
        stack = [r for r in roots if r in self.blocks]
        while stack:
            cur = stack.pop()
            if cur in closure:
                continue
            closure.add(cur)
            stack.extend(self.blocks[cur].parents)
        return closure

    def gra_find_suspects(self, tips: Optional[Iterable[BlockId]] = None) -> set:
        """Non-revoked, non-confirmed blocks unreachable from ``tips``.

        ``tips`` defaults to the ledger's own tip set. Validators pass the tips
        they would accept as parents, which is what exposes a buried chain
        whose head is itself an invalid tip.
        """
        roots = self.tips if tips is None else tips
        closure = self.ancestor_closure(roots)
        return {
            bid for bid, b in self.blocks.items()
            if bid not in closure
            and b.status in (BlockStatus.TIP, BlockStatus.UNCONFIRMED)
        }

    # revocation -------------------------------------------------------------------
    def revoke(self, bid: BlockId) -> None:
        block = self.get(bid)
        if block.status is BlockStatus.CONFIRMED:
            raise CannotRevokeConfirmed(bid.hex())
        if block.status is BlockStatus.REVOKED:
            raise InvalidState(f"{bid.hex()} is already revoked")
        block.status = BlockStatus.REVOKED
        self.tips.discard(bid)
        self.unconfirmed.discard(bid)
        for p in block.parents:
            parent = self.blocks[p]
            if parent.is_genesis or parent.status is BlockStatus.REVOKED:
                continue
            if all(self.blocks[c].status is BlockStatus.REVOKED for c in self.children[p]):
                self.tips.add(p)

    def blocks_by(self, author: int) -> list:
        return [b for b in self.blocks.values() if b.author == author]
