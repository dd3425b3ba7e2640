# 解耦分片训练桌面实现 - 容错模块
from src.resilience.snapshot import (
    LearnerCheckpoint, SyncerCheckpoint, PendingSnapshot, Snapshot,
    begin_snapshot, learner_on_marker, syncer_finalize_snapshot,
    persist_snapshot, load_snapshot, latest_snapshot,
)
from src.resilience.recovery import (
    RecoveryAttempt, RecoveryRecord, select_peer, install_recovery, recover_learner, shadow_state,
)
