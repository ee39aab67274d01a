import os
import sys


def main():
    """entry point of the clpm console script: `clpm fit ...` runs `manage.py clpm fit ...`"""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'clpm.settings')
    from django.core.management import execute_from_command_line
    execute_from_command_line([sys.argv[0], 'clpm'] + sys.argv[1:])


if __name__ == '__main__':
    main()
