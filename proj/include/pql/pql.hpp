#pragma once

#include "pql/ast.hpp"
#include "pql/follow.hpp"
#include "pql/model.hpp"
#include "pql/oracle.hpp"
#include "pql/parse.hpp"
#include "pql/rng.hpp"
#include "pql/runtime.hpp"
#include "pql/semantics.hpp"
#include "pql/validate.hpp"
#include "pql/value.hpp"
#include "pql/vocab.hpp"
