#include "tokenswap/errors.hpp"
