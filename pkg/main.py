#!/usr/bin/env python3
"""
MaskMotion Desk - Main Entry Point
Configure logging, then hand over to the command line
"""
import os
import sys

from loguru import logger

import config


def setup_logging():
    """Colourised stdout sink plus a rotating debug file"""
    logger.remove()
    logger.add(
        sys.stdout,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        level=config.LOG_LEVEL,
        colorize=True
    )

    logger.add(
        os.path.join(config.LOG_DIR, config.LOG_FILE),
        rotation=config.LOG_ROTATION,
        retention=config.LOG_RETENTION,
        level="DEBUG",
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"
    )


def main():
    """Main entry point"""
    if sys.version_info < (3, 9):
        print("Python 3.9+ is required")
        sys.exit(1)

    setup_logging()
    logger.debug(f"Environment: {config.ENVIRONMENT}")

    from cli import run
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
