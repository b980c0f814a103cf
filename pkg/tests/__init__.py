# Tests package for usm
