"""Operation groups and the named injection sites of a capsule network."""
from __future__ import annotations

import enum
from dataclasses import dataclass


class GroupId(str, enum.Enum):
    """The four operation groups noise can be injected into."""

    MAC_OUTPUTS = "mac_outputs"
    ACTIVATIONS = "activations"
    SOFTMAX = "softmax"
    LOGITS_UPDATE = "logits_update"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Site:
    """One instrumented tensor of the forward pass.

    ``name`` is unique per network (e.g. ``classcaps_s``); ``layer`` is the
    network layer the tensor belongs to (``classcaps``). A layer may own more
    than one site of the same group, so sweeps address sites by ``name``.
    """

    name: str
    layer: str
    group: GroupId
    shape: tuple[int, ...] = ()
