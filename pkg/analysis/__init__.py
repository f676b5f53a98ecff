"""Result tables, statistics and run reports."""
