"""Language-guided skill discovery from demonstrations.

Pipeline: generate demonstrations in a goal-conditioned gridworld, obtain
a fine initial segmentation (LLM or oracle), merge segments into a
discrete skill library with temporal variational inference under a
description-length penalty, then reuse the frozen skills for hierarchical
RL on new long-horizon tasks.
"""

__version__ = "0.1.0"
