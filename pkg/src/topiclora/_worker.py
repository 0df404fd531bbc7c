"""Training worker entry point (``python -m topiclora._worker``).

Kept out of the package's import graph so running it as a module does not
re-execute an already-imported module.
"""

import sys

from .training import run_worker


def main(argv) -> int:
    base_path, shard_path, recipe_json, out_dir, topic_id = argv
    run_worker(base_path, shard_path, recipe_json, out_dir, int(topic_id))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
