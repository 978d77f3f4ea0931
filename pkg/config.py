LOGGING_LEVEL = "INFO"
LOG_STDOUT = False

# Cap on per-volume evaluation fan-out; $BCP_LAB_THREADS takes precedence.
BCP_LAB_THREADS = 1

# Default data and run roots; $BCP_LAB_DATA and $BCP_LAB_RESULTS take precedence.
BCP_LAB_DATA = "data"
BCP_LAB_RESULTS = "runs"
