"""``mtcd <component> ...`` dispatches to each component's command line."""

import sys

from . import bench, client, dispatcher, executor, provisioner

COMPONENTS = {
    "dispatcher": dispatcher,
    "executor": executor,
    "client": client,
    "provision": provisioner,
    "bench": bench,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMPONENTS:
        names = "|".join(COMPONENTS)
        print(f"usage: mtcd {{{names}}} ...", file=sys.stderr)
        return 0 if argv and argv[0] in ("-h", "--help") else 2
    return COMPONENTS[argv[0]].main(argv[1:])


if __name__ == "__main__":
    sys.exit(main())
