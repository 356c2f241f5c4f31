#pragma once

// Instruction-fusion toolkit: umbrella header.

#include "iftk/backend.hpp"
#include "iftk/cache.hpp"
#include "iftk/clock.hpp"
#include "iftk/config.hpp"
#include "iftk/corpus.hpp"
#include "iftk/embedding.hpp"
#include "iftk/errors.hpp"
#include "iftk/evolve.hpp"
#include "iftk/fusion.hpp"
#include "iftk/http_backend.hpp"
#include "iftk/job.hpp"
#include "iftk/metrics.hpp"
#include "iftk/mock_backend.hpp"
#include "iftk/rate_limiter.hpp"
#include "iftk/report.hpp"
#include "iftk/retry.hpp"
#include "iftk/tokenizer.hpp"
#include "iftk/util.hpp"
