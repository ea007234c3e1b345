from enum import IntEnum

# Process exit status of a cli command

class ExitCode(IntEnum):
    # Command finished and wrote all of its outputs
    SUCCESS = 0
    # Bad flags, unreadable config or malformed input file
    USAGE_ERROR = 1
    # The pipeline itself failed while running
    RUNTIME_ERROR = 2
