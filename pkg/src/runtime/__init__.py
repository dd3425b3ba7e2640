# 解耦分片训练桌面实现 - 运行时模块
from src.runtime.messages import MessageKind, Message, encode_frame, decode_frame
from src.runtime.transport import LinkModel, DeterministicTransport, Channel
from src.runtime.grace import GraceConfig, Ema, grace_window
from src.runtime.learner import LearnerState, Learner, learner_tick
from src.runtime.syncer import LearnerInfo, SyncerState, MergeOutcome, RoundRecord, RunMetrics, Syncer
from src.runtime.workload import Workload, TimingWorkload, scaled_examples
