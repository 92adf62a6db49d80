import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

from vtlab.corpus import CorpusConfig, generate_corpus  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(num_actions=12, clips_per_video=4, num_videos=24, raw_dim=8,
                                        max_words_per_video=10, seed=3))
