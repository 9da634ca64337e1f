"""
RaterLab subcommands. Each module exposes ``add_parser(subparsers, parents)``
and ``execute(args, config)``.
"""
from cli.commands import cluster, evaluate, fuse, pipeline, report, simulate, style, uncertainty

COMMANDS = (fuse, style, cluster, uncertainty, evaluate, report, simulate, pipeline)
