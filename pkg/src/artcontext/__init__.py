"""artcontext: builds weak image-text supervision from open-access art
scholarship and adapts frozen projection heads with low-rank updates.

Stages: harvest -> extract -> embed -> align -> train -> eval/retrieve.
"""

__version__ = "0.1.0"

EMB_FORMAT_VERSION = 1
LORA_FORMAT_VERSION = 1
