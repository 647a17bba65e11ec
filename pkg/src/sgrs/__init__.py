"""Secure group rekeying over a ring of shared nonces."""
from .primitives import Nonce, SealedBox, SeededRng, kdf2, open_box, seal, xor_combine
from .group import (
    GroupRing,
    GroupSnapshot,
    MemberState,
    bootstrap,
    check_ring_invariant,
    count_keys_bruteforce,
    count_keys_closed_form,
    derive_multicast_key,
)
from .simnet import Network, SizeModel
from .protocols import (
    AuthServerStub,
    issue_join_tag,
    run_join,
    run_leave,
    run_merge_multi,
    run_merge_pair,
    run_partition,
)

__version__ = "0.1.0"
