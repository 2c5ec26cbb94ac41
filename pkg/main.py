#!/usr/bin/env python3
"""Main entry point for the DeMT command-line tool."""

import sys

from src.demt.cli import main
from src.demt.logger import logger

if __name__ == "__main__":
    try:
        exit_code = main()
        sys.exit(exit_code)
    except KeyboardInterrupt:
        logger.info("Run interrupted by user")
        sys.exit(0)
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        sys.exit(1)
