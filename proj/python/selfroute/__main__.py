import sys

from . import cli


def main() -> int:
    code, out, err = cli(sys.argv[1:])
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code


if __name__ == "__main__":
    sys.exit(main())
