"""Protocol replicas: PBFT (all-to-all), chained HotStuff (star) and Kauri (tree)."""

from .core import Block, QuorumCertificate, Replica, RunContext, SigScheme, SystemParams
from .hotstuff import HotStuffReplica
from .kauri import KauriReplica, TreeConfig, build_tree
from .pbft import PbftReplica

__all__ = ["Block", "QuorumCertificate", "Replica", "RunContext", "SigScheme", "SystemParams",
           "HotStuffReplica", "KauriReplica", "TreeConfig", "build_tree", "PbftReplica"]
