# Operation counting and cost census
